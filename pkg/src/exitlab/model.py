"""Layered backbone with an internal classifier and an exit-policy head per layer.

Layers are indexed from 1 to L in every public function. Parameters are split
into two disjoint groups: ``theta`` (all policy heads) and ``omega`` (input
projection, residual blocks and classifier heads).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import DTYPE, Dense, Parameter, ReLU, Rng, softmax
from .errors import ConfigError, DataError, UsageError

EXIT, CONTINUE = 0, 1
EXIT_BIAS_INIT = -2.2
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    num_classes: int
    num_layers: int = 12
    hidden_dim: int = 32
    policy_hidden_dim: int = 16

    def validate(self):
        if self.num_layers < 2:
            raise ConfigError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("input_dim", "hidden_dim", "policy_hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        return self


class ResidualBlock:
    """s -> s + W2 relu(W1 s + b1) + b2"""

    def __init__(self, dim: int, gen, name: str):
        self.inner = Dense(dim, dim, gen, name=f"{name}.inner")
        self.act = ReLU()
        self.outer = Dense(dim, dim, gen, name=f"{name}.outer")

    @property
    def params(self):
        return self.inner.params + self.outer.params

    def forward(self, s, record=False):
        h = self.act.forward(self.inner.forward(s, record), record)
        return s + self.outer.forward(h, record)

    def backward(self, ds):
        dh = self.act.backward(self.outer.backward(ds))
        return ds + self.inner.backward(dh)


class PolicyHead:
    """Two-layer MLP over the layer state, producing logits for (Exit, Continue)."""

    def __init__(self, dim: int, hidden: int, gen, name: str):
        self.hidden = Dense(dim, hidden, gen, name=f"{name}.hidden")
        self.act = ReLU()
        self.out = Dense(hidden, 2, gen, name=f"{name}.out")
        self.out.b.values[EXIT] = EXIT_BIAS_INIT

    @property
    def params(self):
        return self.hidden.params + self.out.params

    def forward(self, s, record=False):
        return self.out.forward(self.act.forward(self.hidden.forward(s, record), record), record)

    def backward(self, dlogits):
        return self.hidden.backward(self.act.backward(self.out.backward(dlogits)))


class ModelBundle:
    def __init__(self, config: BackboneConfig, rng: Rng):
        config.validate()
        self.config = config
        gen = rng.stream("init")
        L, h = config.num_layers, config.hidden_dim
        self.embed = Dense(config.input_dim, h, gen, name="embed")
        self.blocks = [ResidualBlock(h, gen, f"block{t}") for t in range(1, L + 1)]
        self.classifiers = [Dense(h, config.num_classes, gen, name=f"classifier{t}")
                            for t in range(1, L + 1)]
        self.policies = [PolicyHead(h, config.policy_hidden_dim, gen, f"policy{t}")
                         for t in range(1, L + 1)]
        # incremented once per block evaluation; lets callers verify early stopping
        self.layers_computed = 0

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    # -- parameter bookkeeping ---------------------------------------------
    @property
    def theta(self) -> list[Parameter]:
        return [p for head in self.policies for p in head.params]

    @property
    def omega(self) -> list[Parameter]:
        ps = list(self.embed.params)
        for blk in self.blocks:
            ps += blk.params
        for clf in self.classifiers:
            ps += clf.params
        return ps

    @property
    def parameters(self) -> list[Parameter]:
        return self.omega + self.theta

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters)

    def _check_layer(self, t: int):
        if not 1 <= t <= self.num_layers:
            raise UsageError(f"layer index {t} outside [1, {self.num_layers}]")

    # -- forward -----------------------------------------------------------
    def states(self, x, upto: int | None = None, record: bool = False) -> list[np.ndarray]:
        upto = self.num_layers if upto is None else upto
        self._check_layer(upto)
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.config.input_dim:
            raise DataError(f"feature dim {x.shape[-1]} != model input_dim {self.config.input_dim}")
        s = self.embed.forward(x, record)
        out = []
        for blk in self.blocks[:upto]:
            s = blk.forward(s, record)
            self.layers_computed += 1
            out.append(s)
        return out

    def step(self, t: int, s_prev):
        """Advance one block: s_t from s_{t-1}, or from the raw input when t == 1."""
        self._check_layer(t)
        if t == 1:
            x = np.asarray(s_prev, dtype=DTYPE)
            if x.shape[-1] != self.config.input_dim:
                raise DataError(f"feature dim {x.shape[-1]} != model input_dim {self.config.input_dim}")
            s_prev = self.embed.forward(x)
        self.layers_computed += 1
        return self.blocks[t - 1].forward(s_prev)

    def classifier_logits(self, t: int, s, record: bool = False):
        self._check_layer(t)
        return self.classifiers[t - 1].forward(s, record)

    def policy_logits(self, t: int, s, record: bool = False):
        self._check_layer(t)
        return self.policies[t - 1].forward(s, record)

    def classify(self, t: int, s):
        return softmax(self.classifier_logits(t, s))

    def exit_prob(self, t: int, s):
        return softmax(self.policy_logits(t, s))[..., EXIT]

    def all_probs(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Class probabilities (L, N, C) and exit probabilities (L, N) at every layer."""
        S = self.states(X)
        P = np.stack([softmax(clf.forward(s)) for clf, s in zip(self.classifiers, S)])
        E = np.stack([softmax(pol.forward(s))[:, EXIT] for pol, s in zip(self.policies, S)])
        return P, E

    # -- backward ----------------------------------------------------------
    def backward_states(self, dstates: dict[int, np.ndarray]):
        """Backpropagate gradients w.r.t. s_t (keyed by 1-based t) into omega.

        Requires a recorded forward covering the deepest key.
        """
        if not dstates:
            return
        top = max(dstates)
        ds = np.zeros_like(dstates[top])
        for t in range(top, 0, -1):
            if t in dstates:
                ds = ds + dstates[t]
            ds = self.blocks[t - 1].backward(ds)
        self.embed.backward(ds)

    def clear(self):
        for layer in [self.embed] + self.classifiers:
            layer.clear()
        for blk in self.blocks:
            blk.inner.clear(); blk.act.clear(); blk.outer.clear()
        for pol in self.policies:
            pol.hidden.clear(); pol.act.clear(); pol.out.clear()

    # -- state snapshots ---------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self.parameters}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters}
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise DataError(f"checkpoint parameter names do not match model: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.values.shape:
                raise DataError(f"{name}: shape {arr.shape} != {p.values.shape}")
            p.values[...] = arr


def build(config: BackboneConfig, rng: Rng) -> ModelBundle:
    return ModelBundle(config, rng)


def expected_param_count(config: BackboneConfig) -> int:
    d, h, C, ph, L = (config.input_dim, config.hidden_dim, config.num_classes,
                      config.policy_hidden_dim, config.num_layers)
    embed = d * h + h
    block = 2 * (h * h + h)
    clf = h * C + C
    pol = h * ph + ph + ph * 2 + 2
    return embed + L * (block + clf + pol)


def forward_states(m: ModelBundle, x, upto: int) -> list[np.ndarray]:
    return m.states(x, upto)


def classify(m: ModelBundle, t: int, s_t) -> np.ndarray:
    return m.classify(t, s_t)


def policy_exit_prob(m: ModelBundle, t: int, s_t) -> float:
    return float(m.exit_prob(t, np.asarray(s_t, dtype=DTYPE)))


def param_groups(m: ModelBundle) -> tuple[list[Parameter], list[Parameter]]:
    return m.theta, m.omega


def digest(params) -> str:
    """SHA-256 over the raw bytes of every parameter, in order."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.values).tobytes())
    return h.hexdigest()


def save_checkpoint(m: ModelBundle, path, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(m.config), "extra": extra or {}}
    arrays = {f"param:{k}": v for k, v in m.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
    m = ModelBundle(BackboneConfig(**meta["config"]), Rng(0))
    m.load_state_dict(state)
    return m, meta.get("extra", {})
